use midband_core::channel_model::{
    channel_frequency_response, raised_cosine, synth_channel, ura_response, ArrayGeometry,
    ChannelTensor, Path, PathSet, PulseConfig,
};
use num_complex::Complex64;
use proptest::prelude::*;
use std::f64::consts::PI;

const TS: f64 = 2.5e-9;

fn path(alpha: Complex64, toa: f64, angles: [f64; 4]) -> Path<f64> {
    Path {
        alpha,
        toa,
        aoa_az: angles[0],
        aoa_el: angles[1],
        aod_az: angles[2],
        aod_el: angles[3],
        field: Complex64::new(0.0, 0.0),
    }
}

/// Closed-form raised cosine, written out independently of the library.
fn rc_oracle(x: f64, beta: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let s = (PI * x).sin() / (PI * x);
    s * (PI * beta * x).cos() / (1.0 - 4.0 * beta * beta * x * x)
}

fn element(az: f64, el: f64, nx: usize, ny: usize, idx: usize) -> Complex64 {
    let (ix, iy) = (idx / ny, idx % ny);
    let _ = nx;
    let phase = -PI * (ix as f64 * el.cos() * az.sin() + iy as f64 * el.sin());
    Complex64::from_polar(1.0, phase)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ura_matches_elementwise_phase(az in -PI..PI, el in -1.5f64..1.5, nx in 1usize..6, ny in 1usize..6) {
        let geom = ArrayGeometry::new(nx, ny).unwrap();
        let a = ura_response(az, el, geom);
        prop_assert_eq!(a.len(), nx * ny);
        for (i, v) in a.iter().enumerate() {
            prop_assert!((v - element(az, el, nx, ny, i)).norm() < 1e-12);
        }
    }
}

#[test]
fn pulse_has_unit_peak_and_nyquist_zeros() {
    let cfg = PulseConfig::new(TS, 0.4).unwrap();
    assert_eq!(raised_cosine(0.0, &cfg), 1.0);
    for k in 1..8 {
        assert_eq!(raised_cosine(k as f64 * TS, &cfg), 0.0);
        assert_eq!(raised_cosine(-(k as f64) * TS, &cfg), 0.0);
    }
    for x in [0.3, 0.77, 1.6, -2.2] {
        assert!((raised_cosine(x * TS, &cfg) - rc_oracle(x, 0.4)).abs() < 1e-12);
    }
}

#[test]
fn pulse_is_continuous_through_its_removable_singularity() {
    let beta = 0.25;
    let cfg = PulseConfig::new(TS, beta).unwrap();
    let x0 = 1.0 / (2.0 * beta);
    let at = raised_cosine(x0 * TS, &cfg);
    let near = rc_oracle(x0 + 1e-6, beta);
    assert!((at - near).abs() < 1e-5, "{at} vs {near}");
}

#[test]
fn synthesis_is_linear_in_path_sets() {
    let rx = ArrayGeometry::new(2, 2).unwrap();
    let tx = ArrayGeometry::new(3, 2).unwrap();
    let cfg = PulseConfig::new(TS, 0.3).unwrap();
    let a: PathSet<f64> = [path(Complex64::new(1.0, 0.5), 3.3 * TS, [0.2, 0.1, -0.4, 0.05])]
        .into_iter()
        .collect();
    let b: PathSet<f64> = [path(Complex64::new(-0.2, 0.9), 5.1 * TS, [-1.0, -0.2, 0.7, 0.3])]
        .into_iter()
        .collect();
    let ha = synth_channel(&a, 8, &cfg, rx, tx).unwrap();
    let hb = synth_channel(&b, 8, &cfg, rx, tx).unwrap();
    let hab = synth_channel(&a.concat(&b), 8, &cfg, rx, tx).unwrap();
    for ((x, y), z) in ha.data().iter().zip(hb.data()).zip(hab.data()) {
        assert!((x + y - z).norm() < 1e-14);
    }
}

#[test]
fn two_off_grid_paths_match_triple_loop() {
    let (nrx, nry, ntx, nty, d) = (2, 2, 3, 3, 10);
    let rx = ArrayGeometry::new(nrx, nry).unwrap();
    let tx = ArrayGeometry::new(ntx, nty).unwrap();
    let beta = 0.35;
    let t_off = 0.4 * TS;
    let cfg = PulseConfig::new(TS, beta).unwrap().with_offset(t_off);
    let paths = vec![
        path(Complex64::new(0.8, -0.3), 2.37 * TS, [0.3, 0.2, -0.6, 0.1]),
        path(Complex64::new(-0.1, 0.4), 4.91 * TS, [-0.9, 0.0, 1.1, -0.25]),
    ];
    let set = PathSet::new(paths.clone());
    let h = synth_channel(&set, d, &cfg, rx, tx).unwrap();
    for tap in 0..d {
        for r in 0..nrx * nry {
            for t in 0..ntx * nty {
                let mut want = Complex64::new(0.0, 0.0);
                for p in &paths {
                    let x = tap as f64 - (p.toa - t_off) / TS;
                    want += p.alpha
                        * rc_oracle(x, beta)
                        * element(p.aoa_az, p.aoa_el, nrx, nry, r)
                        * element(p.aod_az, p.aod_el, ntx, nty, t);
                }
                assert!((h.get(tap, r, t) - want).norm() < 1e-12, "tap {tap} r {r} t {t}");
            }
        }
    }
}

#[test]
fn on_grid_path_occupies_one_tap() {
    let rx = ArrayGeometry::new(2, 2).unwrap();
    let tx = ArrayGeometry::new(4, 4).unwrap();
    let cfg = PulseConfig::new(TS, 0.2).unwrap();
    let alpha = Complex64::new(0.3, 0.4);
    let set = PathSet::new(vec![path(alpha, 3.0 * TS, [0.5, 0.2, -0.3, 0.1])]);
    let h = synth_channel(&set, 8, &cfg, rx, tx).unwrap();
    for tap in 0..8 {
        let e: f64 = h.tap(tap).iter().map(|z| z.norm_sqr()).sum();
        if tap == 3 {
            assert!((e - alpha.norm_sqr() * 64.0).abs() < 1e-12);
        } else {
            assert_eq!(e, 0.0);
        }
    }
}

#[test]
fn frequency_response_matches_direct_dft() {
    let mut h = ChannelTensor::<f64>::zeros(5, 2, 3);
    for (i, z) in h.data_mut().iter_mut().enumerate() {
        *z = Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 1.3).cos());
    }
    let n = 12;
    let f = channel_frequency_response(&h, n).unwrap();
    for k in 0..n {
        for r in 0..2 {
            for t in 0..3 {
                let want: Complex64 = (0..5)
                    .map(|d| h.get(d, r, t) * Complex64::from_polar(1.0, -2.0 * PI * (k * d) as f64 / n as f64))
                    .sum();
                assert!((f.subcarrier(k)[r * 3 + t] - want).norm() < 1e-12);
            }
        }
    }
    assert!(channel_frequency_response(&h, 4).is_err());
}

#[test]
fn invalid_inputs_are_rejected() {
    let g = ArrayGeometry::new(1, 1).unwrap();
    let cfg = PulseConfig::new(TS, 0.2).unwrap();
    assert!(ArrayGeometry::new(0, 2).is_err());
    assert!(PulseConfig::new(TS, 1.5).is_err());
    assert!(PulseConfig::new(0.0, 0.5).is_err());
    assert!(synth_channel(&PathSet::<f64>::default(), 4, &cfg, g, g).is_err());
    let one = PathSet::new(vec![path(Complex64::new(1.0, 0.0), 0.0, [0.0; 4])]);
    assert!(synth_channel(&one, 0, &cfg, g, g).is_err());
}

#[test]
fn nmse_and_cast() {
    let truth = ChannelTensor::from_vec(1, 1, 2, vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)]).unwrap();
    let est = ChannelTensor::from_vec(1, 1, 2, vec![Complex64::new(1.1, 0.0), Complex64::new(0.0, 1.0)]).unwrap();
    assert!((est.nmse(&truth) - 0.01 / 2.0).abs() < 1e-12);
    let single = truth.cast::<f32>();
    assert_eq!(single.get(0, 0, 1).im, 1.0f32);
}
