//! Array geometry, spherical-wave responses and multiuser channel datasets.
//!
//! Angles are carried as sines in `[-1, 1]`. A ULA lies on the y axis with
//! the source at `r·(√(1−θ²), θ, 0)`; a UPA lies in the y–z plane and its
//! source direction is `(cos e·cos a, cos e·sin a, sin e)` with
//! `θ = sin a` and `elevation = sin e`.

use std::f64::consts::TAU;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_store, write_store, F64Writer, Manifest};
use crate::rng::Stream;
use crate::tensor::{ComplexMatrix, C64};

/// Propagation speed used to turn carrier frequency into wavelength.
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GeometryKind {
    Ula,
    Upa { my: usize, mz: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayGeometry {
    kind: GeometryKind,
    spacing: f64,
    wavelength: f64,
    positions: Vec<[f64; 3]>,
}

fn centered(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 - n as f64 + 1.0) / 2.0
}

impl ArrayGeometry {
    /// Half-wavelength ULA with `m` elements.
    pub fn ula(m: usize, wavelength: f64) -> Self {
        Self::ula_with_spacing(m, wavelength, wavelength / 2.0)
    }

    pub fn ula_with_spacing(m: usize, wavelength: f64, spacing: f64) -> Self {
        let positions = (0..m).map(|i| [0.0, centered(i, m) * spacing, 0.0]).collect();
        Self {
            kind: GeometryKind::Ula,
            spacing,
            wavelength,
            positions,
        }
    }

    /// Half-wavelength `my × mz` UPA; element index is `iy·mz + iz`.
    pub fn upa(my: usize, mz: usize, wavelength: f64) -> Self {
        let spacing = wavelength / 2.0;
        let mut positions = Vec::with_capacity(my * mz);
        for iy in 0..my {
            for iz in 0..mz {
                positions.push([0.0, centered(iy, my) * spacing, centered(iz, mz) * spacing]);
            }
        }
        Self {
            kind: GeometryKind::Upa { my, mz },
            spacing,
            wavelength,
            positions,
        }
    }

    pub fn kind(&self) -> GeometryKind {
        self.kind
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn num_elements(&self) -> usize {
        self.positions.len()
    }

    /// Largest pairwise element separation.
    pub fn aperture(&self) -> f64 {
        match self.kind {
            GeometryKind::Ula => self.num_elements().saturating_sub(1) as f64 * self.spacing,
            GeometryKind::Upa { my, mz } => {
                let dy = my.saturating_sub(1) as f64;
                let dz = mz.saturating_sub(1) as f64;
                self.spacing * (dy * dy + dz * dz).sqrt()
            }
        }
    }

    /// `2D²/λ`.
    pub fn rayleigh_distance(&self) -> f64 {
        let d = self.aperture();
        2.0 * d * d / self.wavelength
    }

    /// Cartesian source position for `(θ, elevation, r)`.
    pub fn source_point(&self, theta: f64, elevation: f64, r: f64) -> Result<[f64; 3]> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::Domain(format!("distance must be positive, got {r}")));
        }
        if !(-1.0..=1.0).contains(&theta) {
            return Err(Error::Domain(format!("angle sine {theta} outside [-1, 1]")));
        }
        if !(-1.0..=1.0).contains(&elevation) {
            return Err(Error::Domain(format!("elevation sine {elevation} outside [-1, 1]")));
        }
        let ce = (1.0 - elevation * elevation).sqrt();
        let ca = (1.0 - theta * theta).sqrt();
        Ok([r * ce * ca, r * ce * theta, r * elevation])
    }

    /// `r^(m) − r` for every element, evaluated as
    /// `(|p|² − 2p·s)/(r^(m) + r)` to avoid cancellation.
    pub fn path_differences(&self, theta: f64, elevation: f64, r: f64) -> Result<Vec<f64>> {
        let s = self.source_point(theta, elevation, r)?;
        Ok(self
            .positions
            .iter()
            .map(|p| {
                let pp = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
                let ps = p[0] * s[0] + p[1] * s[1] + p[2] * s[2];
                let num = pp - 2.0 * ps;
                let rm = (r * r + num).max(0.0).sqrt();
                num / (rm + r)
            })
            .collect())
    }

    /// Unit-norm spherical-wave response `b(θ, r)` for a source in the
    /// azimuth plane.
    pub fn array_response(&self, theta: f64, r: f64) -> Result<ComplexMatrix> {
        self.array_response_3d(theta, 0.0, r)
    }

    pub fn array_response_3d(&self, theta: f64, elevation: f64, r: f64) -> Result<ComplexMatrix> {
        let m = self.num_elements();
        let amp = 1.0 / (m as f64).sqrt();
        let k = TAU / self.wavelength;
        let diffs = self.path_differences(theta, elevation, r)?;
        let data = diffs.iter().map(|&d| C64::from_polar(amp, -k * d)).collect();
        ComplexMatrix::from_vec(m, 1, data)
    }
}

/// One propagation path of one user.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathParams {
    pub alpha: C64,
    /// Angle sine in `[-1, 1]`.
    pub theta: f64,
    /// Elevation sine; zero for a ULA.
    pub elevation: f64,
    /// Distance from the array center in meters.
    pub r: f64,
}

fn default_fc() -> f64 {
    100e9
}
fn default_r_min() -> f64 {
    5.0
}
fn default_r_max() -> f64 {
    80.0
}
fn default_pt() -> f64 {
    1.0
}
fn default_geometry() -> GeometryKind {
    GeometryKind::Ula
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Antenna count.
    pub m: usize,
    /// Users.
    pub k: usize,
    /// RF chains.
    pub n_rf: usize,
    /// Paths per user.
    pub l: usize,
    #[serde(default = "default_fc")]
    pub f_c: f64,
    #[serde(default = "default_r_min")]
    pub r_min: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    pub snr_db: f64,
    #[serde(default = "default_pt")]
    pub p_t: f64,
    #[serde(default = "default_geometry")]
    pub geometry: GeometryKind,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(m: usize, k: usize, n_rf: usize, l: usize, snr_db: f64) -> Self {
        Self {
            m,
            k,
            n_rf,
            l,
            f_c: default_fc(),
            r_min: default_r_min(),
            r_max: default_r_max(),
            snr_db,
            p_t: default_pt(),
            geometry: GeometryKind::Ula,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k == 0 || self.k > self.n_rf || self.n_rf > self.m {
            return bad(format!(
                "need 1 ≤ K ≤ N_RF ≤ M, got K={}, N_RF={}, M={}",
                self.k, self.n_rf, self.m
            ));
        }
        if self.l == 0 {
            return bad("need at least one path".into());
        }
        if !(self.r_min > 0.0) || !(self.r_max >= self.r_min) {
            return bad(format!("bad distance range [{}, {}]", self.r_min, self.r_max));
        }
        if !(self.f_c > 0.0) || !(self.p_t > 0.0) || !self.snr_db.is_finite() {
            return bad("carrier, power and SNR must be positive and finite".into());
        }
        if let GeometryKind::Upa { my, mz } = self.geometry {
            if my * mz != self.m {
                return bad(format!("UPA {my}×{mz} does not have M={} elements", self.m));
            }
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.f_c
    }

    /// `σ² = P_t·10^(−SNR/10)`.
    pub fn noise_variance(&self) -> f64 {
        self.p_t * 10f64.powf(-self.snr_db / 10.0)
    }

    pub fn geometry(&self) -> ArrayGeometry {
        let lambda = self.wavelength();
        match self.geometry {
            GeometryKind::Ula => ArrayGeometry::ula(self.m, lambda),
            GeometryKind::Upa { my, mz } => ArrayGeometry::upa(my, mz, lambda),
        }
    }
}

/// `h = √(M/L)·Σ α_ℓ·e^{−j2πr_ℓ/λ}·b(θ_ℓ, r_ℓ)`.
pub fn synthesize(geometry: &ArrayGeometry, paths: &[PathParams]) -> Result<ComplexMatrix> {
    let m = geometry.num_elements();
    let k = TAU / geometry.wavelength();
    let scale = (m as f64 / paths.len().max(1) as f64).sqrt();
    let mut h = ComplexMatrix::zeros(m, 1);
    for p in paths {
        let b = geometry.array_response_3d(p.theta, p.elevation, p.r)?;
        let g = p.alpha * C64::from_polar(scale, -k * p.r);
        for (hi, bi) in h.data_mut().iter_mut().zip(b.data()) {
            *hi += g * bi;
        }
    }
    Ok(h)
}

/// Draw `L` paths for one user and synthesize its channel column.
pub fn generate_channel(
    scenario: &ScenarioConfig,
    geometry: &ArrayGeometry,
    stream: &mut Stream,
) -> Result<(ComplexMatrix, Vec<PathParams>)> {
    let planar = matches!(geometry.kind(), GeometryKind::Upa { .. });
    let paths: Vec<PathParams> = (0..scenario.l)
        .map(|_| {
            let alpha = stream.complex_normal(1.0);
            let theta = stream.uniform(-1.0, 1.0);
            let elevation = if planar { stream.uniform(-1.0, 1.0) } else { 0.0 };
            let r = stream.uniform(scenario.r_min, scenario.r_max);
            PathParams {
                alpha,
                theta,
                elevation,
                r,
            }
        })
        .collect();
    let h = synthesize(geometry, &paths)?;
    Ok((h, paths))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }

    fn stream_label(self) -> &'static str {
        match self {
            Split::Train => "dataset/train",
            Split::Validation => "dataset/val",
            Split::Test => "dataset/test",
        }
    }
}

/// One multiuser realization: `H` is `M×K`, `paths[k]` holds user k's paths.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSample {
    pub h: ComplexMatrix,
    pub paths: Vec<Vec<PathParams>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBatch {
    pub split: Split,
    pub scenario: ScenarioConfig,
    pub samples: Vec<ChannelSample>,
}

impl ChannelBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> Vec<&ComplexMatrix> {
        self.samples.iter().map(|s| &s.h).collect()
    }

    /// Re-synthesize every `H` from its stored paths.
    pub fn regenerate(&self) -> Result<Vec<ComplexMatrix>> {
        let geom = self.scenario.geometry();
        self.samples
            .iter()
            .map(|s| {
                let cols = s
                    .paths
                    .iter()
                    .map(|p| synthesize(&geom, p))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&ComplexMatrix> = cols.iter().collect();
                Ok(ComplexMatrix::hstack(&refs))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: ChannelBatch,
    pub validation: ChannelBatch,
    pub test: ChannelBatch,
}

/// Floor 70% train, floor 15% validation, remainder test.
pub fn split_sizes(size: usize) -> (usize, usize, usize) {
    let train = size * 70 / 100;
    let val = size * 15 / 100;
    (train, val, size - train - val)
}

/// Generate sample `index` of a split from its own substream.
pub fn generate_sample(
    scenario: &ScenarioConfig,
    geometry: &ArrayGeometry,
    split: Split,
    index: usize,
) -> Result<ChannelSample> {
    let mut stream = Stream::new(scenario.seed, split.stream_label(), index as u64);
    let mut cols = Vec::with_capacity(scenario.k);
    let mut paths = Vec::with_capacity(scenario.k);
    for _ in 0..scenario.k {
        let (h, p) = generate_channel(scenario, geometry, &mut stream)?;
        cols.push(h);
        paths.push(p);
    }
    let refs: Vec<&ComplexMatrix> = cols.iter().collect();
    Ok(ChannelSample {
        h: ComplexMatrix::hstack(&refs),
        paths,
    })
}

pub fn generate_split(scenario: &ScenarioConfig, split: Split, count: usize) -> Result<ChannelBatch> {
    scenario.validate()?;
    let geometry = scenario.geometry();
    let samples = (0..count)
        .into_par_iter()
        .map(|i| generate_sample(scenario, &geometry, split, i).map_err(|e| e.at_sample(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelBatch {
        split,
        scenario: scenario.clone(),
        samples,
    })
}

pub fn generate_dataset(scenario: &ScenarioConfig, size: usize) -> Result<Dataset> {
    if size < 10 {
        return Err(Error::Domain(format!("dataset needs at least 10 samples, got {size}")));
    }
    let (ntr, nva, nte) = split_sizes(size);
    Ok(Dataset {
        train: generate_split(scenario, Split::Train, ntr)?,
        validation: generate_split(scenario, Split::Validation, nva)?,
        test: generate_split(scenario, Split::Test, nte)?,
    })
}

/// Add i.i.d. `CN(0, σ²)` noise to every entry.
pub fn add_awgn(x: &ComplexMatrix, sigma2: f64, stream: &mut Stream) -> Result<ComplexMatrix> {
    if !(sigma2 >= 0.0) {
        return Err(Error::Domain(format!("noise variance must be ≥ 0, got {sigma2}")));
    }
    if sigma2 == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for z in out.data_mut() {
        *z += stream.complex_normal(sigma2);
    }
    Ok(out)
}

const SNAPSHOT_VERSION: u32 = 1;

/// Write a split to `dir` as a manifest plus `(H, paths)` payload.
pub fn save_snapshot(batch: &ChannelBatch, dir: &Path) -> Result<()> {
    let s = &batch.scenario;
    let mut m = Manifest::new();
    m.push("format", "xlhbf-dataset");
    m.push("version", SNAPSHOT_VERSION);
    m.push("split", batch.split.label());
    m.push("scenario", serde_json::to_string(s)?);
    m.push("samples", batch.len());
    m.push("layout", "per sample: H (M×K row-major, re/im), then per user per path: alpha re, alpha im, theta, elevation, r");
    let mut w = F64Writer::new();
    for sample in &batch.samples {
        w.push_matrix(&sample.h);
        for user in &sample.paths {
            for p in user {
                w.push_complex(p.alpha);
                w.push(p.theta);
                w.push(p.elevation);
                w.push(p.r);
            }
        }
    }
    write_store(dir, &m, &w)
}

pub fn load_snapshot(dir: &Path) -> Result<ChannelBatch> {
    let (m, mut r) = read_store(dir)?;
    if m.get("format")? != "xlhbf-dataset" {
        return Err(Error::Format("not a dataset snapshot".into()));
    }
    let version: u32 = m.parse("version")?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let scenario: ScenarioConfig = serde_json::from_str(m.get("scenario")?)?;
    let split = Split::parse(m.get("split")?)?;
    let n: usize = m.parse("samples")?;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let h = r.next_matrix(scenario.m, scenario.k)?;
        let mut paths = Vec::with_capacity(scenario.k);
        for _ in 0..scenario.k {
            let mut user = Vec::with_capacity(scenario.l);
            for _ in 0..scenario.l {
                user.push(PathParams {
                    alpha: r.next_complex()?,
                    theta: r.next()?,
                    elevation: r.next()?,
                    r: r.next()?,
                });
            }
            paths.push(user);
        }
        samples.push(ChannelSample { h, paths });
    }
    r.finish()?;
    Ok(ChannelBatch {
        split,
        scenario,
        samples,
    })
}
