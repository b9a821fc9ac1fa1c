use std::collections::HashSet;
use std::f64::consts::{PI, TAU};

use xlhbf::channel::*;
use xlhbf::rng::Stream;
use xlhbf::tensor::{ComplexMatrix, C64};

const LAMBDA: f64 = 3e-3;

fn euclid(p: [f64; 3], s: [f64; 3]) -> f64 {
    ((p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2) + (p[2] - s[2]).powi(2)).sqrt()
}

#[test]
fn two_element_broadside_matches_geometry() {
    let g = ArrayGeometry::ula(2, LAMBDA);
    let d = LAMBDA / 2.0;
    let r = 3.7;
    let b = g.array_response(0.0, r).unwrap();
    // elements at ±d/2 on the y axis, source on the x axis
    let rm = euclid([0.0, d / 2.0, 0.0], [r, 0.0, 0.0]);
    assert!((rm - (r * r + d * d / 4.0).sqrt()).abs() < 1e-15);
    let expect = C64::from_polar(1.0 / 2f64.sqrt(), -TAU / LAMBDA * (rm - r));
    for i in 0..2 {
        assert!((b[(i, 0)] - expect).norm() < 1e-9, "{} vs {expect}", b[(i, 0)]);
    }
}

#[test]
fn responses_are_unit_norm_with_constant_modulus() {
    let mut s = Stream::new(3, "resp", 0);
    for &m in &[1usize, 2, 7, 32, 128] {
        let g = ArrayGeometry::ula(m, LAMBDA);
        for _ in 0..20 {
            let b = g
                .array_response(s.uniform(-1.0, 1.0), s.uniform(0.5, 200.0))
                .unwrap();
            assert!((b.frobenius_norm() - 1.0).abs() < 1e-12);
            for z in b.data() {
                assert!((z.norm() - 1.0 / (m as f64).sqrt()).abs() < 1e-14);
            }
        }
    }
    let upa = ArrayGeometry::upa(8, 8, LAMBDA);
    let b = upa.array_response_3d(0.4, -0.3, 2.0).unwrap();
    assert!((b.frobenius_norm() - 1.0).abs() < 1e-12);
}

#[test]
fn ula_closed_form_matches_euclidean() {
    let m = 64;
    let g = ArrayGeometry::ula(m, LAMBDA);
    let d = g.spacing();
    let mut s = Stream::new(4, "cf", 0);
    for _ in 0..50 {
        let theta = s.uniform(-1.0, 1.0);
        let r = s.uniform(1.0, 100.0);
        let diffs = g.path_differences(theta, 0.0, r).unwrap();
        let src = [r * (1.0 - theta * theta).sqrt(), r * theta, 0.0];
        for (i, &diff) in diffs.iter().enumerate() {
            let delta = (2.0 * i as f64 - m as f64 + 1.0) / 2.0;
            let closed = (r * r + delta * delta * d * d - 2.0 * r * delta * d * theta).sqrt();
            let direct = euclid(g.positions()[i], src);
            let lib = diff + r;
            assert!((closed - direct).abs() / closed < 1e-12);
            assert!((lib - closed).abs() / closed < 1e-12);
        }
    }
}

#[test]
fn far_field_deviation_shrinks_with_distance() {
    let m = 128;
    let g = ArrayGeometry::ula(m, LAMBDA);
    let rr = g.rayleigh_distance();
    let d = g.spacing();
    for &theta in &[-0.7, 0.0, 0.35] {
        let mut prev = f64::INFINITY;
        for &c in &[10.0, 100.0, 1000.0] {
            let b = g.array_response(theta, c * rr).unwrap();
            let dev = (0..m)
                .map(|i| {
                    let delta = (2.0 * i as f64 - m as f64 + 1.0) / 2.0;
                    let planar = TAU / LAMBDA * delta * d * theta;
                    let diff = b[(i, 0)].arg() - planar;
                    // wrap to (−π, π]
                    (diff + PI).rem_euclid(TAU) - PI
                })
                .fold(0.0f64, |a, x| a.max(x.abs()));
            assert!(dev < prev, "c={c}: {dev} !< {prev}");
            prev = dev;
        }
        assert!(prev < 0.01);
    }
}

#[test]
fn rayleigh_distances() {
    let s = ScenarioConfig::new(128, 4, 4, 3, 10.0);
    let rr = s.geometry().rayleigh_distance();
    assert!((rr - 24.19).abs() <= 0.01, "{rr}");
    assert_eq!(ArrayGeometry::ula(1, LAMBDA).rayleigh_distance(), 0.0);
    let two = ArrayGeometry::ula_with_spacing(2, 3e-3, 1.5e-3).rayleigh_distance();
    assert!((two - 1.5e-3).abs() < 1e-15);
}

#[test]
fn unit_gain_single_path_has_norm_sqrt_m() {
    let g = ArrayGeometry::ula(32, LAMBDA);
    let p = PathParams {
        alpha: C64::new(1.0, 0.0),
        theta: 0.2,
        elevation: 0.0,
        r: 9.0,
    };
    let h = synthesize(&g, &[p]).unwrap();
    assert!((h.frobenius_norm() - 32f64.sqrt()).abs() < 1e-12);
}

#[test]
fn channel_power_matches_antenna_count() {
    let scen = ScenarioConfig::new(32, 1, 1, 3, 10.0);
    let g = scen.geometry();
    let mut s = Stream::new(11, "power", 0);
    let n = 10_000;
    let mut acc = 0.0;
    for _ in 0..n {
        acc += generate_channel(&scen, &g, &mut s).unwrap().0.frobenius_norm_sqr();
    }
    let mean = acc / n as f64;
    assert!((mean / 32.0 - 1.0).abs() < 0.05, "{mean}");
}

#[test]
fn deterministic_and_regenerable() {
    let mut scen = ScenarioConfig::new(16, 2, 2, 3, 10.0);
    scen.seed = 5;
    let a = generate_dataset(&scen, 40).unwrap();
    let b = generate_dataset(&scen, 40).unwrap();
    assert_eq!(a, b);
    for batch in [&a.train, &a.validation, &a.test] {
        let regen = batch.regenerate().unwrap();
        for (s, h) in batch.samples.iter().zip(&regen) {
            assert_eq!(&s.h, h);
        }
    }
    assert_eq!((a.train.len(), a.validation.len(), a.test.len()), (28, 6, 6));
}

fn hash_sample(h: &ComplexMatrix) -> Vec<u64> {
    h.data().iter().flat_map(|z| [z.re.to_bits(), z.im.to_bits()]).collect()
}

#[test]
fn different_seeds_share_no_samples() {
    let mut scen = ScenarioConfig::new(8, 2, 2, 2, 10.0);
    scen.seed = 1;
    let a = generate_dataset(&scen, 200).unwrap();
    scen.seed = 2;
    let b = generate_dataset(&scen, 200).unwrap();
    let mut seen = HashSet::new();
    for batch in [&a.train, &a.validation, &a.test] {
        for s in &batch.samples {
            seen.insert(hash_sample(&s.h));
        }
    }
    assert_eq!(seen.len(), 200);
    for batch in [&b.train, &b.validation, &b.test] {
        for s in &batch.samples {
            assert!(!seen.contains(&hash_sample(&s.h)));
        }
    }
}

#[test]
fn awgn_statistics() {
    let x = ComplexMatrix::from_fn(1, 1, |_, _| C64::new(0.3, -0.2));
    let mut s = Stream::new(2, "awgn", 0);
    assert_eq!(add_awgn(&x, 0.0, &mut s).unwrap(), x);

    let n = 100_000;
    let mut sig = Stream::new(2, "signal", 0);
    let (mut var, mut cross, mut sx, mut sn) = (0.0, C64::new(0.0, 0.0), 0.0, 0.0);
    for _ in 0..n {
        let xi = ComplexMatrix::scalar(sig.complex_normal(1.0));
        let y = add_awgn(&xi, 0.1, &mut s).unwrap();
        let noise = y[(0, 0)] - xi[(0, 0)];
        var += noise.norm_sqr();
        cross += noise * xi[(0, 0)].conj();
        sx += xi[(0, 0)].norm_sqr();
        sn += noise.norm_sqr();
    }
    let var = var / n as f64;
    assert!((var / 0.1 - 1.0).abs() < 0.03, "{var}");
    let corr = cross.norm() / (sx * sn).sqrt();
    assert!(corr < 0.01, "{corr}");
}

#[test]
fn snr_bookkeeping() {
    for &snr in &[-10.0, 0.0, 3.3, 10.0, 25.0] {
        let mut s = ScenarioConfig::new(8, 1, 1, 1, snr);
        s.p_t = 2.5;
        let sigma2 = s.noise_variance();
        assert!((10.0 * (s.p_t / sigma2).log10() - snr).abs() < 1e-12);
    }
}

#[test]
fn snapshot_round_trip() {
    let mut scen = ScenarioConfig::new(8, 2, 2, 2, 10.0);
    scen.seed = 9;
    let batch = generate_split(&scen, Split::Validation, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_snapshot(&batch, dir.path()).unwrap();
    let back = load_snapshot(dir.path()).unwrap();
    assert_eq!(back, batch);
}
