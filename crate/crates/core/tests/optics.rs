use num_complex::Complex64;
use optikonv::optics::pgm::{dose_map, read_psf, psf_image};
use optikonv::optics::retrieval::{psf_loss, random_phase};
use optikonv::optics::*;
use optikonv::tensor::ops::conv2d;
use optikonv::tensor::Tensor;
use optikonv::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(distance: f64, aperture: f64) -> OpticsConfig {
    OpticsConfig {
        mask_pixels: 64,
        pitch: 8e-6,
        distance,
        aperture,
        ..OpticsConfig::default()
    }
}

fn random_field(n: usize, pitch: f64, seed: u64) -> ComplexField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let re = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let im = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ComplexField::from_parts(n, n, pitch, re, im)
}

fn random_psf(p: usize, rng: &mut ChaCha8Rng) -> Psf {
    let v: Vec<f64> = (0..p * p).map(|_| rng.random_range(0.0..1.0)).collect();
    Psf::normalize(p, p, &v).unwrap()
}

fn random_image(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn zero_distance_is_identity() {
    let cfg = small(0.0, 32.0);
    let f = random_field(64, cfg.pitch, 1);
    let out = propagate(&f, &cfg).unwrap();
    assert_eq!(out.re(), f.re());
    assert_eq!(out.im(), f.im());
}

#[test]
fn plane_wave_energy_is_conserved() {
    let cfg = small(5e-3, 32.0);
    let n = 64;
    let mut f = ComplexField::zeros(n, n, cfg.pitch);
    for i in 0..n {
        for j in 0..n {
            let ph = std::f64::consts::TAU * (3.0 * i as f64 + 5.0 * j as f64) / n as f64;
            f.set(i, j, Complex64::from_polar(1.0, ph));
        }
    }
    let out = propagate(&f, &cfg).unwrap();
    let rel = (out.energy() - f.energy()).abs() / f.energy();
    assert!(rel < 1e-6, "relative energy change {rel}");
}

#[test]
fn energy_never_increases() {
    let cfg = OpticsConfig {
        distance: 12e-3,
        ..small(0.0, 32.0)
    };
    let f = random_field(64, cfg.pitch, 2);
    let out = propagate(&f, &cfg).unwrap();
    assert!(out.energy() <= f.energy() * (1.0 + 1e-6));
}

#[test]
fn point_emitter_round_trip() {
    let cfg = small(5e-3, 32.0);
    let mut f = ComplexField::zeros(64, 64, cfg.pitch);
    f.set(32, 32, Complex64::new(1.0, 0.0));
    let there = propagate(&f, &cfg).unwrap();
    let back = propagate(&there, &cfg.with_distance(-5e-3)).unwrap();
    let err = back.max_abs_diff(&f);
    assert!(err < 1e-4, "round trip error {err}");
}

#[test]
fn sampling_violation_is_reported() {
    let cfg = OpticsConfig {
        distance: 50e-3,
        ..small(0.0, 32.0)
    };
    let f = ComplexField::zeros(64, 64, cfg.pitch);
    let err = propagate(&f, &cfg).unwrap_err();
    assert!(matches!(err, Error::Sampling { .. }));
    assert!(err.to_string().contains("required pitch"));
}

#[test]
fn field_size_must_match_config() {
    let cfg = small(5e-3, 32.0);
    let f = ComplexField::zeros(32, 32, cfg.pitch);
    assert!(matches!(propagate(&f, &cfg), Err(Error::Geometry(_))));
}

#[test]
fn psf_is_normalized_and_non_negative() {
    for seed in 0..5 {
        let cfg = small(5e-3, 30.0);
        let m = PhaseMask::from_unwrapped(&random_phase(64, seed), cfg).unwrap();
        let p = psf_from_phase(&m).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-6);
        assert!(p.intensity().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn flat_mask_small_aperture_peaks_at_center() {
    let cfg = small(5e-3, 4.0);
    let p = psf_from_phase(&PhaseMask::flat(cfg)).unwrap();
    let (arg, _) = p
        .intensity()
        .iter()
        .enumerate()
        .fold((0, f32::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    assert_eq!((arg / 64, arg % 64), (32, 32));
}

#[test]
fn empty_aperture_is_degenerate() {
    let cfg = small(5e-3, -1.0);
    assert!(matches!(psf_from_phase(&PhaseMask::flat(cfg)), Err(Error::Degenerate(_))));
}

#[test]
fn global_phase_offset_leaves_psf_unchanged() {
    let cfg = small(5e-3, 30.0);
    let phase = random_phase(64, 3);
    let a = psf_from_phase(&PhaseMask::from_unwrapped(&phase, cfg).unwrap()).unwrap();
    for c in [0.3, 1.7, 4.0] {
        let shifted: Vec<f64> = phase.iter().map(|p| p + c).collect();
        let b = psf_from_phase(&PhaseMask::from_unwrapped(&shifted, cfg).unwrap()).unwrap();
        let d = a
            .intensity()
            .iter()
            .zip(b.intensity())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(d < 1e-6, "offset {c}: {d}");
    }
}

/// Textbook convolution with the flipped kernel, O(n^4).
fn brute_force(img: &Tensor, psf: &Psf) -> Vec<f64> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (psf.height(), psf.width());
    let (oh, ow) = (h + ph - 1, w + pw - 1);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0f64;
                for i in 0..h {
                    for j in 0..w {
                        let (a, b) = (y as isize - i as isize, x as isize - j as isize);
                        if a < 0 || b < 0 || a >= ph as isize || b >= pw as isize {
                            continue;
                        }
                        let k = psf.at(ph - 1 - a as usize, pw - 1 - b as usize) as f64;
                        acc += img.at(&[ch, i, j]) as f64 * k;
                    }
                }
                out[(ch * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

#[test]
fn optical_convolve_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..100 {
        let c = rng.random_range(1..=3);
        let h = rng.random_range(1..=10);
        let w = rng.random_range(1..=10);
        let p = rng.random_range(1..=7);
        let img = random_image(c, h, w, &mut rng);
        let psf = random_psf(p, &mut rng);
        let got = optical_convolve(&img, &psf).unwrap();
        let want = brute_force(&img, &psf);
        let err = got
            .data()
            .iter()
            .zip(&want)
            .map(|(&a, &b)| (a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "case {case}: {err}");
    }
}

#[test]
fn optical_convolve_matches_padded_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_image(3, 8, 8, &mut rng);
    let psf = random_psf(5, &mut rng);
    let got = optical_convolve(&img, &psf).unwrap();
    let x = img.reshape(&[3, 1, 8, 8]).unwrap();
    let w = Tensor::new(&[1, 1, 5, 5], psf.intensity().to_vec()).unwrap();
    let want = conv2d(&x, &w, None, 1, 4).unwrap();
    assert!(got.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-5));
}

#[test]
fn delta_psf_pads_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = random_image(2, 5, 6, &mut rng);
    let out = optical_convolve(&img, &Psf::delta()).unwrap();
    assert_eq!(out.shape(), img.shape());
    assert_eq!(out.data(), img.data());
}

#[test]
fn constant_image_has_constant_plateau() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let psf = random_psf(5, &mut rng);
    let img = Tensor::full(&[1, 12, 12], 0.7);
    let out = optical_convolve(&img, &psf).unwrap();
    for y in 4..12 {
        for x in 4..12 {
            assert!((out.at(&[0, y, x]) - 0.7).abs() < 1e-6);
        }
    }
}

#[test]
fn unnormalized_psf_is_rejected() {
    let img = Tensor::full(&[1, 4, 4], 1.0);
    let psf = Psf::new(2, 2, vec![1.0; 4]).unwrap();
    assert!(matches!(optical_convolve(&img, &psf), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn non_negative_input_gives_non_negative_output(seed in 0u64..1000, h in 1usize..9, p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::new(&[1, h, h], (0..h * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let psf = random_psf(p, &mut rng);
        let out = optical_convolve(&img, &psf).unwrap();
        prop_assert!(out.data().iter().all(|&v| v >= 0.0));
        prop_assert!((out.sum() - img.sum()).abs() < 1e-4 * (1.0 + img.sum().abs()));
    }
}

#[test]
fn gs_reconstructs_known_mask_psf() {
    let cfg = small(5e-3, 46.0);
    let m = PhaseMask::from_unwrapped(&random_phase(64, 99), cfg).unwrap();
    let target = psf_from_phase(&m).unwrap();
    let got = psf_from_phase(&gerchberg_saxton(&target, &cfg, 200).unwrap()).unwrap();
    let ncc = normalized_cross_correlation(got.intensity(), target.intensity());
    assert!(ncc >= 0.9, "ncc {ncc}");
}

#[test]
fn gs_recovers_airy_spot() {
    let cfg = small(5e-3, 4.0);
    let target = psf_from_phase(&PhaseMask::flat(cfg)).unwrap();
    let got = psf_from_phase(&gerchberg_saxton(&target, &cfg, 200).unwrap()).unwrap();
    let ncc = normalized_cross_correlation(got.intensity(), target.intensity());
    assert!(ncc >= 0.99, "ncc {ncc}");
}

#[test]
fn gs_rejects_zero_iterations() {
    let cfg = small(5e-3, 4.0);
    let target = psf_from_phase(&PhaseMask::flat(cfg)).unwrap();
    assert!(gerchberg_saxton(&target, &cfg, 0).is_err());
}

#[test]
fn sgd_beats_gs_on_known_mask() {
    let cfg = small(5e-3, 46.0);
    let m = PhaseMask::from_unwrapped(&random_phase(64, 99), cfg).unwrap();
    let target = psf_from_phase(&m).unwrap();
    let gs = psf_loss(&psf_from_phase(&gerchberg_saxton(&target, &cfg, 200).unwrap()).unwrap(), &target);
    let r = retrieve_phase_sgd(&target, &cfg, 500, 0.3, None).unwrap();
    let sgd = psf_loss(&psf_from_phase(&r.mask).unwrap(), &target);
    assert!(sgd < 0.2 * gs, "sgd {sgd} vs gs {gs}");
    assert!(r.loss_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn sgd_fits_sparse_spots() {
    let cfg = small(12e-3, 32.0);
    let target = sparse_spot_target(64, 8, 1.5, 16, 3).unwrap();
    let r = retrieve_phase_sgd(&target, &cfg, 500, 0.1, None).unwrap();
    assert!(r.loss_history.iter().all(|l| l.is_finite()));
    let p = psf_from_phase(&r.mask).unwrap();
    let ncc = normalized_cross_correlation(p.intensity(), target.intensity());
    assert!(ncc >= 0.95, "ncc {ncc}");
}

#[test]
fn sgd_with_fab_model_outputs_dose_ready_mask() {
    let cfg = small(12e-3, 32.0);
    let target = sparse_spot_target(64, 4, 1.5, 16, 5).unwrap();
    let fab = FabModel {
        levels: 16,
        dose_blur_sigma: 0.5,
    };
    let r = retrieve_phase_sgd(&target, &cfg, 100, 0.1, Some(fab)).unwrap();
    assert_eq!(r.mask.levels(), 16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dose.pgm");
    export_dose_map(&r.mask, &path).unwrap();
    let back = read_dose_map(&path, 16, cfg).unwrap();
    assert_eq!(back.phase(), r.mask.phase());
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5 64 64 65535\n"));
}

#[test]
fn binary_dose_values() {
    let cfg = small(5e-3, 32.0);
    let m = PhaseMask::from_unwrapped(&random_phase(64, 8), cfg).unwrap();
    let b = apply_fab_model(&m, &FabModel { levels: 2, dose_blur_sigma: 0.0 }).unwrap();
    let d = dose_map(&b).unwrap();
    assert!(d.pixels.iter().all(|&v| v == 0 || v == 32768));
}

#[test]
fn psf_image_round_trip_preserves_shape() {
    let cfg = small(5e-3, 20.0);
    let p = psf_from_phase(&PhaseMask::from_unwrapped(&random_phase(64, 4), cfg).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("psf.pgm");
    psf_image(&p).write(&path).unwrap();
    let back = read_psf(&path).unwrap();
    let ncc = normalized_cross_correlation(back.intensity(), p.intensity());
    assert!(ncc > 0.9999, "{ncc}");
}

#[test]
fn phase_mask_checkpoint_round_trip() {
    let cfg = small(5e-3, 20.0);
    let m = apply_fab_model(
        &PhaseMask::from_unwrapped(&random_phase(64, 6), cfg).unwrap(),
        &FabModel::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.tnsr");
    m.save(&path).unwrap();
    let back = PhaseMask::load(&path).unwrap();
    assert_eq!(back.phase(), m.phase());
    assert_eq!(back.levels(), 16);
    assert_eq!(back.config().aperture, 20.0);
}

#[test]
fn sensor_noise_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = Tensor::zeros(&[1, 100, 100]);
    let noisy = add_sensor_noise(&s, 0.1, &mut rng).unwrap();
    let n = noisy.len() as f64;
    let mean = noisy.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = noisy.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.005);
    assert!((var.sqrt() - 0.1).abs() < 0.005);
    assert_eq!(add_sensor_noise(&s, 0.0, &mut rng).unwrap().data(), s.data());
}
